#include "phrase_lm/cli.hpp"

int main(int argc, char** argv) { return phrase_lm::run(argc, argv); }
