fn main() {
    std::process::exit(layout_refine::run());
}
