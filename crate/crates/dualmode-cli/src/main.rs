fn main() {
    eprintln!("dualmode: not wired up yet");
    std::process::exit(2);
}
