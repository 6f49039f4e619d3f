#include "synref/cli.hpp"

int main(int argc, char** argv) { return synref::cli::run_main(argc, argv); }
