#include "macl/cli.hpp"

int main(int argc, char** argv) { return macl::cli::run(argc, argv); }
