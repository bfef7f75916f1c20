#include "normbench/experiment.hpp"

int main(int argc, char** argv) { return normbench::cli_main(argc, argv); }
