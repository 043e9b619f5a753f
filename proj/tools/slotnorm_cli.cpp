#include "slotnorm/harness.hpp"

int main(int argc, char** argv) { return slotnorm::run_cli(argc, argv); }
