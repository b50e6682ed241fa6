#include "mtbit/cli.hpp"

int main(int argc, char** argv) { return mtbit::run_cli(argc, argv); }
