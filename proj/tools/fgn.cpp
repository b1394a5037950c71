#include <iostream>

#include "fgn/cli.hpp"

int main(int argc, char** argv) { return fgn::run_cli(argc, argv, std::cout, std::cerr); }
