"""Twenty hand-built 8x8 worlds with scripted action strings.

Action letters: S stand still, L turn left, R turn right, F go straight.
Start poses are (x, y, heading) with heading 0..3 = N, E, S, W.
"""

WORLDS = [
    ("empty", [
        "........",
        "........",
        "........",
        "........",
        "........",
        "........",
        "........",
        "........"], (0, 0, 1), "FFFFFFFRFRFFFFFFLFLFFFFFFRFRFFFFFFLFLFFFFFFRF"),
    ("centre_pillar", [
        "........",
        "........",
        "........",
        "...##...",
        "...##...",
        "........",
        "........",
        "........"], (1, 3, 1), "FFFFLFFRRFFFFLLFFFFFFSSRFFFRFFFFFF"),
    ("corridor", [
        "########",
        "########",
        "########",
        "........",
        "########",
        "########",
        "########",
        "########"], (0, 3, 1), "FFFFFFFFF"),
    ("l_corner", [
        "........",
        "........",
        "...#....",
        "...###..",
        "........",
        "........",
        "........",
        "........"], (2, 4, 0), "FFFRFFRFFFLFFFFRRFFFFFFLFF"),
    ("walled_box", [
        "........",
        ".######.",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".##.###.",
        "........"], (3, 7, 0), "FFFFFFLLFRFFRFFFFFRFFFFFFRFFFFFFRFFF"),
    ("checker_pillars", [
        "........",
        ".#.#.#..",
        "........",
        ".#.#.#..",
        "........",
        ".#.#.#..",
        "........",
        "........"], (0, 7, 0), "FFFFFFFRFFFFFFFRFFFFFFFRFFFFFF"),
    ("diagonal_wall", [
        "#.......",
        ".#......",
        "..#.....",
        "...#....",
        "....#...",
        ".....#..",
        "......#.",
        "........"], (7, 0, 2), "FFFFFFFRFFFFFFFRFFRFFLL"),
    ("two_rooms", [
        "...#....",
        "...#....",
        "...#....",
        "........",
        "...#....",
        "...#....",
        "...#....",
        "...#...."], (0, 3, 1), "FFFFFFFLFFFRRFFFFFFFRFFFFLLFF"),
    ("spiral", [
        "........",
        ".######.",
        ".#....#.",
        ".#.##.#.",
        ".#.#..#.",
        ".#.####.",
        ".#......",
        ".#######"], (0, 0, 2), "FFFFFFFLLFFFFFFFRFFFFFFFRFFFFFRFFFFFLFFFF"),
    ("dead_end", [
        "########",
        "#......#",
        "#.####.#",
        "#.#..#.#",
        "#.#..#.#",
        "#.####.#",
        "#......#",
        "########"], (1, 1, 1), "FFFFFRFFFFFRFFFFFRFFFFFRF"),
    ("wall_hugger", [
        "........",
        "........",
        "........",
        "........",
        "........",
        "........",
        "........",
        "#######."], (0, 6, 1), "FFFFFFFLFFFFFFLFFFFFFFLFFFFFSFFRR"),
    ("bump_test", [
        "..#.....",
        "..#.....",
        "........",
        "........",
        "........",
        "........",
        "........",
        "........"], (1, 0, 1), "FFFFFLFFFLFFFRRFFF"),
    ("scatter", [
        "#.....#.",
        "...#....",
        ".#...#..",
        "....#...",
        "..#....#",
        "......#.",
        ".#.#....",
        "........"], (0, 7, 1), "FFFFFFFLFFFFFFFLFFFLFFFRFFFFLFFFRR"),
    ("narrow_gap", [
        "........",
        "........",
        "........",
        "####.###",
        "........",
        "........",
        "........",
        "........"], (4, 6, 0), "FFFFFFLFFFFRRFFFFFFFFRFFRFFFFFF"),
    ("u_shape", [
        "........",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".######.",
        "........",
        "........",
        "........"], (3, 1, 2), "FFFFSSLLFFFRFFFRFFFFFFRFFFFFFFRFFF"),
    ("plus_wall", [
        "........",
        "...#....",
        "...#....",
        ".#####..",
        "...#....",
        "...#....",
        "........",
        "........"], (0, 0, 2), "FFFFFFFLFFFFFFFLFFFFFFFLFFFFFFFLFF"),
    ("stand_still", [
        "........",
        "........",
        "...#....",
        "........",
        "........",
        "........",
        "........",
        "........"], (3, 4, 0), "SSSSLSSSRSSS"),
    ("edge_runner", [
        "........",
        "........",
        "........",
        "........",
        "........",
        "........",
        "........",
        "........"], (7, 7, 0), "FFFFFFFFLFFFFFFFFLFFFFFFFFRRR"),
    ("islands", [
        "........",
        ".##..##.",
        ".##..##.",
        "........",
        "........",
        ".##..##.",
        ".##..##.",
        "........"], (3, 3, 1), "FFFFLFFFLFFFFFFFLFFFFFFFLFFFFFFFLFFF"),
    ("tight_room", [
        "########",
        "########",
        "##....##",
        "##....##",
        "##....##",
        "##....##",
        "########",
        "########"], (2, 2, 1), "FFFRFFFRFFFRFFFFRRL"),
]

LETTERS = {"S": 0, "L": 1, "R": 2, "F": 3}


def actions(script: str) -> list[int]:
    return [LETTERS[c] for c in script]
