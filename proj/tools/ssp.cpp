#include <iostream>

#include "ssp/cli.hpp"

int main(int argc, char** argv) { return ssp::run_cli(argc, argv, std::cout, std::cerr); }
