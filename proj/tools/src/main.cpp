#include "fuselm/cli.hpp"

int main(int argc, char** argv) { return fuselm::run_cli(argc, argv); }
