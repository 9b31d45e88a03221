#include "chorus/cli.hpp"

int main(int argc, char** argv) {
    return chorus::cli::run_cli(argc, argv);
}
