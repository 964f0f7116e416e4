#include <iostream>

#include "rial/commands.hpp"

int main(int argc, char** argv) { return rial::cli::run_cli(argc, argv, std::cerr); }
