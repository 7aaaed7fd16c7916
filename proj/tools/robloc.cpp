#include <iostream>

#include "robloc/cli_eval.hpp"

int main(int argc, char** argv) { return robloc::run_cli(argc, argv, std::cout, std::cerr); }
