#include "ugformer/cli.hpp"

int main(int argc, char** argv) { return ugformer::run(argc, argv); }
