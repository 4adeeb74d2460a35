#include <cstdio>
int main() { std::puts("ucap: not wired yet"); return 1; }
