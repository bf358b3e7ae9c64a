fn main() {
    std::process::exit(penalized_icp::cli::run_from_args(std::env::args_os()));
}
