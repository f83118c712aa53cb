#include "tucan/cli.hpp"

int main(int argc, char** argv) { return tucan::run_cli(argc, argv); }
