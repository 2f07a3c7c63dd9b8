#include "xspec/cli.h"

int main(int argc, char** argv) { return xspec::cli_main(argc, argv); }
