#include "unblur/glyphs.hpp"
int main() { return 0; }
