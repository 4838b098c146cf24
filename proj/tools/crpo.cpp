#include <iostream>

#include "crpo/cli.hpp"

int main(int argc, char** argv) { return crpo::cli::run(argc, argv, std::cout, std::cerr); }
