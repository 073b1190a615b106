#include "specpl/cli.hpp"

int main(int argc, char** argv) { return specpl::cli_main(argc, argv); }
