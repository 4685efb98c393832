#include <iostream>

#include "fever/cli/app.hpp"

int main(int argc, char** argv) { return fever::cli::run_cli(argc, argv, std::cout, std::cerr); }
