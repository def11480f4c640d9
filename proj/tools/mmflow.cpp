#include "mmflow/cli.hpp"

int main(int argc, char** argv) { return mmflow::run_cli(argc, argv); }
