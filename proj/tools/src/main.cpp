#include "casemix/cli/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return casemix::cli::run(argc, argv, std::cout, std::cerr); }
