// CLI entry point; subcommands land here as the modules come online.
int main() { return 0; }
