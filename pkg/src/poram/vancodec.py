"""Halving level uploads with a shared Vandermonde matrix.

A level upload carries 2k blocks of which at most k are real.  Client and
server share the matrix M (2k x k, M[i][j] = (i+1)^j over GF(2^61 - 1)).
The client solves M_S x = b_S, where S marks the k rows it wants
reproduced exactly, and sends only x.  The server expands y = M x; rows in
S equal the original blocks bit for bit, and every row of y is a fixed
linear function of x, so the expansion reveals nothing about which rows
were real.

Solving M_S x = b_S is polynomial interpolation: x is the coefficient
vector of the degree-<k polynomial passing through ``(i+1, b_i)`` for
``i in S``; expansion is evaluation at all 2k points.  Distinct evaluation
points make the system nonsingular by construction.

Payload bytes pack into field elements 7 bytes at a time (2^56 < p), so
real blocks round-trip losslessly.  Rows outside S may hold elements with
all 61 bits used; they are truncated back to 7 bytes when re-serialized,
which is harmless because their content is never used.
"""

PRIME = (1 << 61) - 1

_CHUNK = 7
_CHUNK_MASK = (1 << 56) - 1


def elements_per_block(block_bytes: int) -> int:
    return (block_bytes + _CHUNK - 1) // _CHUNK


def bytes_to_elements(raw: bytes) -> tuple:
    """Pack bytes into field elements, 7 bytes per element, little-endian."""
    return tuple(int.from_bytes(raw[i:i + _CHUNK], "little")
                 for i in range(0, len(raw), _CHUNK))


def elements_to_bytes(elements, size: int) -> bytes:
    out = b"".join((int(e) & _CHUNK_MASK).to_bytes(_CHUNK, "little")
                   for e in elements)
    if len(out) < size:
        out = out.ljust(size, b"\0")
    return out[:size]


def vander_matrix(rows: int, cols: int) -> list:
    """The shared matrix M with M[i][j] = (i+1)^j mod p."""
    matrix = []
    for i in range(rows):
        row = [1] * cols
        for j in range(1, cols):
            row[j] = (row[j - 1] * (i + 1)) % PRIME
        matrix.append(row)
    return matrix


def _poly_from_roots(points) -> list:
    """Coefficients of prod(z - x_i), lowest degree first."""
    coeffs = [1]
    for x in points:
        nxt = [0] * (len(coeffs) + 1)
        for t, c in enumerate(coeffs):
            nxt[t] = (nxt[t] - c * x) % PRIME
            nxt[t + 1] = (nxt[t + 1] + c) % PRIME
        coeffs = nxt
    return coeffs


def _synthetic_div(coeffs, root) -> list:
    """Divide a monic-rooted polynomial by (z - root); returns the quotient."""
    k = len(coeffs) - 1
    quot = [0] * k
    acc = coeffs[k]
    for t in range(k - 1, -1, -1):
        quot[t] = acc
        acc = (coeffs[t] + root * acc) % PRIME
    return quot


def _interpolation_matrix(points) -> list:
    """A with x = A @ b solving sum_j x_j * point^j = b at each point."""
    k = len(points)
    full = _poly_from_roots(points)
    matrix = [[0] * k for _ in range(k)]
    for i, x_i in enumerate(points):
        quot = _synthetic_div(full, x_i)
        denom = 1
        for j, x_j in enumerate(points):
            if j != i:
                denom = (denom * (x_i - x_j)) % PRIME
        if denom == 0:
            raise AssertionError("duplicate evaluation points")
        inv = pow(denom, PRIME - 2, PRIME)
        for t in range(k):
            matrix[t][i] = (quot[t] * inv) % PRIME
    return matrix


def compress_upload(blocks, real_positions) -> list:
    """Solve for the k vectors x such that expanding reproduces the rows
    listed in ``real_positions`` exactly.

    ``blocks`` holds 2k equal-length element vectors; ``real_positions``
    names exactly k of them (pad the set with dummy rows when fewer are
    real).  Returns k element vectors.
    """
    n = len(blocks)
    k = n // 2
    if n != 2 * k:
        raise ValueError("block count must be even")
    positions = sorted(real_positions)
    if len(positions) != k:
        raise ValueError(f"need exactly {k} pinned rows, got {len(positions)}")
    if k == 0:
        return []
    if positions[0] < 0 or positions[-1] >= n:
        raise ValueError("pinned row outside the upload")

    points = [s + 1 for s in positions]
    interp = _interpolation_matrix(points)
    width = len(blocks[0])
    pinned = [blocks[s] for s in positions]
    out = []
    for t in range(k):
        row = interp[t]
        vec = [0] * width
        for i in range(k):
            coeff = row[i]
            if coeff:
                src = pinned[i]
                for c in range(width):
                    vec[c] = (vec[c] + coeff * src[c]) % PRIME
        out.append(tuple(vec))
    return out


def decompress_upload(x, n_out: int) -> list:
    """Expand k coefficient vectors to n_out rows by evaluating at 1..n_out.

    With k = 0 there is nothing pinned and every row expands to zeros (an
    all-dummy level).
    """
    k = len(x)
    if k == 0:
        return [()] * n_out
    width = len(x[0])
    out = []
    for point in range(1, n_out + 1):
        vec = [0] * width
        for c in range(width):
            acc = 0
            for t in range(k - 1, -1, -1):
                acc = (acc * point + x[t][c]) % PRIME
            vec[c] = acc
        out.append(tuple(vec))
    return out
