// SPDX-License-Identifier: Apache-2.0

#include "debias/cli.hpp"

int main(int argc, char** argv) { return debias::run(argc, argv); }
