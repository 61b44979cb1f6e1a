fn main() {
    std::process::exit(rhogap::cli::run_from_args());
}
