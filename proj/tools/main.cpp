#include "captionforge/cli.hpp"

int main(int argc, char** argv) { return captionforge::cli::run(argc, argv); }
