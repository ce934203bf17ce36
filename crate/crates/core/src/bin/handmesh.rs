fn main() {
    std::process::exit(handmesh::cli::run(std::env::args_os()));
}
