#include "stgm/cli.hpp"

int main(int argc, char** argv) { return stgm::run_cli(argc, argv); }
