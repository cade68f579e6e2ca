#include "thalsynth/cli.hpp"

int main(int argc, char** argv) { return thalsynth::run_cli(argc, argv); }
