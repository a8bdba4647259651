#include "cli.hpp"

int main(int argc, char** argv) { return mtv::cli::run(argc, argv); }
