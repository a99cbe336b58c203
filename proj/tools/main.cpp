#include "cli.hpp"

int main(int argc, char** argv) { return es::cli::run(argc, argv); }
