#include "unblur/training.hpp"
int main() { return 0; }
