#include "protomix/cli.hpp"

int main(int argc, char** argv) {
  return protomix::cli::dispatch(argc, argv);
}
