fn main() {
    std::process::exit(segmeta::run(std::env::args_os()));
}
