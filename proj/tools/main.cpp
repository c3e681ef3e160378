#include "mapedit/cli.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    return mapedit::app::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
