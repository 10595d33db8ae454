"""Independent mt19937_64 + Fisher-Yates reference for the pinned schedule order."""

MASK = (1 << 64) - 1


class MT64:
    def __init__(self, seed: int) -> None:
        self.mt = [0] * 312
        self.mt[0] = seed & MASK
        for i in range(1, 312):
            prev = self.mt[i - 1]
            self.mt[i] = (6364136223846793005 * (prev ^ (prev >> 62)) + i) & MASK
        self.index = 312

    def _twist(self) -> None:
        upper, lower = 0xFFFFFFFF80000000, 0x7FFFFFFF
        for i in range(312):
            x = (self.mt[i] & upper) | (self.mt[(i + 1) % 312] & lower)
            xa = x >> 1
            if x & 1:
                xa ^= 0xB5026F5AA96619E9
            self.mt[i] = self.mt[(i + 156) % 312] ^ xa
        self.index = 0

    def next(self) -> int:
        if self.index >= 312:
            self._twist()
        y = self.mt[self.index]
        self.index += 1
        y ^= (y >> 29) & 0x5555555555555555
        y ^= (y << 17) & 0x71D67FFFEDA60000
        y ^= (y << 37) & 0xFFF7EEE000000000
        y ^= y >> 43
        return y & MASK


def below(rng: MT64, n: int) -> int:
    if n <= 1:
        return 0
    limit = MASK - (MASK % n)
    x = rng.next()
    while x >= limit:
        x = rng.next()
    return x % n


def order(num_classes: int, seed: int) -> list[int]:
    rng = MT64(seed)
    items = list(range(num_classes))
    for i in range(num_classes, 1, -1):
        j = below(rng, i)
        items[i - 1], items[j] = items[j], items[i - 1]
    return items


if __name__ == "__main__":
    assert MT64(5489).next() == 14514284786278117030  # std::mt19937_64 default-seed first output
    print(order(10, 123))
    print(order(100, 7)[:10])
