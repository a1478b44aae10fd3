#include "stochca/cli.hpp"

int main(int argc, char** argv) { return stochca::cli::parse_and_dispatch(argc, argv); }
