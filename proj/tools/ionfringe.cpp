#include <ionfringe/cli.hpp>

int main(int argc, char** argv) { return ionfringe::cli::run(argc, argv); }
