#include "tandem/cli.hpp"

int main(int argc, char** argv) { return tandem::cli_main(argc, argv); }
