#include "capsct/eval/cli.hpp"

int main(int argc, char** argv) { return capsct::eval::run_cli(argc, argv); }
