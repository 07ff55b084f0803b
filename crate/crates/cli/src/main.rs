fn main() {
    println!("shardsim");
}
