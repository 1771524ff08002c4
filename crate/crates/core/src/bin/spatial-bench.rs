fn main() {
    std::process::exit(spatial_bench::cli::main_with_args(std::env::args_os()));
}
