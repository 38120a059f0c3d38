fn main() {
    std::process::exit(planksynth::run(std::env::args_os()));
}
