#include "qsde/cli.hpp"

int main(int argc, char** argv) { return qsde::run_cli(argc, argv); }
