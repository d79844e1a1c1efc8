#include "mcpnet/cli.hpp"

int main(int argc, char** argv) { return mcpnet::run_cli(argc, argv); }
