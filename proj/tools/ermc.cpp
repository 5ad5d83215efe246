#include "cli.hpp"

int main(int argc, char** argv) { return ermc::cli::run_cli(argc, argv); }
