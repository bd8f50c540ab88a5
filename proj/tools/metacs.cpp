#include "metacs/cli/dispatch.hpp"

int main(int argc, char** argv) { return metacs::cli::dispatch(argc, argv); }
