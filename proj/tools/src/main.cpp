#include "ecgmamba/cli.hpp"

int main(int argc, char** argv) { return ecgmamba::cli::main(argc, argv); }
