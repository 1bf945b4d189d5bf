#include "commands.hpp"

int main(int argc, char** argv) { return s2m::cli::run(argc, argv); }
