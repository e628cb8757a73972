#include <iostream>
#include <string>
#include <vector>

#include "r2d/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return r2d::run_cli(args, std::cout, std::cerr);
}
