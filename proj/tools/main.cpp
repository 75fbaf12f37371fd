#include <iostream>

#include "kbvqa/cli.hpp"

int main(int argc, char** argv) { return kbvqa::run_cli(argc, argv, std::cout, std::cerr); }
