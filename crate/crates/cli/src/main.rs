fn main() {
    let code = loadsim_cli::dispatch(std::env::args().collect());
    std::process::exit(code);
}
