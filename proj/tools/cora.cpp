#include "cora/cli.hpp"

int main(int argc, char** argv) { return cora::cli::run(argc, argv); }
