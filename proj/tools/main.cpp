#include "cli.hpp"

int main(int argc, char** argv) { return roomroam::cli::run(argc, argv); }
