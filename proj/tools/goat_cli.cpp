// SPDX-License-Identifier: Apache-2.0
#include <cstdio>

int main() {
    std::puts("goat_cli: not wired up yet");
    return 0;
}
