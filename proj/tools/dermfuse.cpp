// CLI entry point; subcommands land as the pipeline modules come online.
#include <cstdio>

int main(int argc, char** argv) {
    (void)argv;
    if (argc < 2) {
        std::fprintf(stderr, "usage: dermfuse <subcommand> [options]\n");
        return 2;
    }
    std::fprintf(stderr, "error: unknown subcommand\n");
    return 2;
}
