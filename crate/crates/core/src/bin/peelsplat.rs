fn main() {
    std::process::exit(peelsplat::cli::run());
}
