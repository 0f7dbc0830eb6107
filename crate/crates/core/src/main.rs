fn main() {
    std::process::exit(driftfollow::cli::main());
}
