fn main() {
    std::process::exit(geowarp::cli::run(std::env::args_os()));
}
