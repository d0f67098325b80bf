/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#include "zsad/cli.hpp"

int main(int argc, char** argv)
{
    return zsad::cli::run(argc, argv);
}
