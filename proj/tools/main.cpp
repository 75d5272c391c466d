#include "cli.hpp"

int main(int argc, char** argv) { return misim::cli::run(argc, argv); }
