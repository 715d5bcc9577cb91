#include "stableflow/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return stableflow::cli::run(argc, argv, std::cout, std::cerr); }
