#include <iostream>

#include "mia/cli.hpp"

int main(int argc, char** argv) { return mia::cli::run(argc, argv, std::cout, std::cerr); }
