fn main() {
    std::process::exit(lore_cli::run(std::env::args_os()));
}
