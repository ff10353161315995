#include <iostream>

#include "r2kd/cli.hpp"

int main(int argc, char** argv) { return r2kd::cli_main(argc, argv, std::cout, std::cerr); }
