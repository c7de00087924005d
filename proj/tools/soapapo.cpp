#include <iostream>

#include "soapapo/cli.hpp"

int main(int argc, char** argv) { return soapapo::run_cli(argc, argv, std::cout, std::cerr); }
