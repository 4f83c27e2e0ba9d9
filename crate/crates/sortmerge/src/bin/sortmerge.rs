fn main() {
    flowgate_sortmerge::cli::main();
}
