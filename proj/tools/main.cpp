#include "cli.hpp"

int main(int argc, char** argv) { return tbloc::cli::run(argc, argv); }
