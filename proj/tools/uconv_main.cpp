#include "uconv/cli.hpp"

int main(int argc, char** argv) { return uconv::cli::cli_main(argc, argv); }
