#include "lfdlm/cli.hpp"

int main(int argc, char** argv) { return lfdlm::cli::run(argc, argv); }
