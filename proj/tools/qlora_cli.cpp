#include "qlora/cli.hpp"

int main(int argc, char** argv) { return qlora::cli::run(argc, argv); }
