#include "ragkit/cli.hpp"

int main(int argc, char** argv) { return ragkit::run_cli(argc, argv); }
