fn main() {
    std::process::exit(clipin::cli::run());
}
