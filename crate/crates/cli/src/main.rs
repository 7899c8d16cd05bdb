fn main() {
    println!("srpose-kit");
}
