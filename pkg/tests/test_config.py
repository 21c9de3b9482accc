import os
import tempfile
import unittest

from src.config import (
    ConfigFileError,
    ConfigSyntaxError,
    EmptyConfigError,
    InvalidConfigError,
    MissingSubcommandError,
    UnknownSubcommandError,
    coerce_value,
    config_schema,
    default_seed,
    load_config,
    parse_config_text,
)


class TestParseConfigText(unittest.TestCase):
    def test_comments_and_overrides(self):
        entries = parse_config_text(
            """\
# cone over the tetrahedral face
domain = tetra-face
h = 0.2   # coarse
h = 0.15

modes = 1=1.0, 2=0.25
"""
        )
        self.assertEqual(entries, {"domain": "tetra-face", "h": "0.15", "modes": "1=1.0, 2=0.25"})

    def test_missing_separator(self):
        with self.assertRaises(ConfigSyntaxError) as caught:
            parse_config_text("h = 0.1\nrefine 2\n", "run.cfg")
        self.assertIn("run.cfg:2", str(caught.exception))
        with self.assertRaises(ConfigSyntaxError):
            parse_config_text("= 0.1\n")


class TestCoerceValue(unittest.TestCase):
    def test_types(self):
        self.assertEqual(coerce_value("refine", "3", {"type": "integer"}), 3)
        self.assertEqual(coerce_value("h", "0.25", {"type": "number"}), 0.25)
        for word in ("true", "Yes", "on", "1"):
            self.assertIs(coerce_value("verbose", word, {"type": "boolean"}), True)
        for word in ("false", "NO", "off", "0"):
            self.assertIs(coerce_value("verbose", word, {"type": "boolean"}), False)
        self.assertEqual(
            coerce_value("radii", "0.1, 0.2,0.3", {"type": "array", "items": {"type": "number"}}),
            [0.1, 0.2, 0.3],
        )
        self.assertEqual(coerce_value("unknown", "x", None), "x")

    def test_errors(self):
        with self.assertRaises(InvalidConfigError):
            coerce_value("refine", "2.5", {"type": "integer"})
        with self.assertRaises(InvalidConfigError):
            coerce_value("h", "small", {"type": "number"})
        with self.assertRaises(InvalidConfigError):
            coerce_value("verbose", "maybe", {"type": "boolean"})


class TestLoadConfig(unittest.TestCase):
    def _write(self, directory, text):
        path = os.path.join(directory, "run.cfg")
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_file_and_overrides(self):
        with tempfile.TemporaryDirectory() as directory:
            path = self._write(directory, "subcommand = eig\nh = 0.2\nrefine = 1\n")
            config = load_config(path, {"h": "0.1"})
        self.assertEqual(config.subcommand, "eig")
        self.assertEqual(config.h, 0.1)
        self.assertEqual(config.refine, 1)
        self.assertEqual(config.seed, default_seed)

    def test_subcommand_defaults(self):
        config = load_config(None, {}, "harmonic")
        self.assertEqual((config.h, config.refine, config.count), (0.15, 0, 3))
        config = load_config(None, {}, "tile")
        self.assertEqual((config.domain, config.n), ("simplex", 3))
        config = load_config(None, {"modes": "1=1.0, 2@1 -1=0.5"}, "harmonic")
        self.assertEqual(config.modes, ["1=1.0", "2@1 -1=0.5"])

    def test_empty_file(self):
        with tempfile.TemporaryDirectory() as directory:
            path = self._write(directory, "# nothing here\n\n")
            with self.assertRaises(EmptyConfigError):
                load_config(path, {}, "eig")
            config = load_config(path, {"count": "2"}, "eig")
        self.assertEqual(config.count, 2)

    def test_missing_file(self):
        with tempfile.TemporaryDirectory() as directory:
            with self.assertRaises(ConfigFileError):
                load_config(os.path.join(directory, "absent.cfg"), {}, "eig")

    def test_subcommand_errors(self):
        with self.assertRaises(MissingSubcommandError):
            load_config(None, {"h": "0.1"})
        with self.assertRaises(UnknownSubcommandError):
            load_config(None, {}, "solve")

    def test_validation(self):
        for overrides in (
            {"h": "0.6"},
            {"h": "0"},
            {"grading": "0.5"},
            {"domain": "cube"},
            {"refine": "7"},
            {"unknown_key": "1"},
        ):
            with self.assertRaises(InvalidConfigError, msg=str(overrides)):
                load_config(None, overrides, "eig")
        with self.assertRaises(InvalidConfigError):
            load_config(None, {"modes": "one=1"}, "harmonic")
        with self.assertRaises(InvalidConfigError):
            load_config(None, {"radii": "0.1"}, "branch")
        with self.assertRaises(InvalidConfigError):
            load_config(None, {"n": "6"}, "tile")

    def test_parameter_range(self):
        with self.assertRaises(InvalidConfigError):
            load_config(None, {"lam_min": "1.8", "lam_max": "1.3"}, "bifurcate")
        with self.assertRaises(InvalidConfigError):
            load_config(None, {"lam_max": "1.0"}, "bifurcate")
        config = load_config(None, {"lam_min": "0.5", "lam_max": "1.0"}, "bifurcate")
        self.assertEqual((config.lam_min, config.lam_max), (0.5, 1.0))

    def test_schema_is_per_subcommand(self):
        self.assertIn("warp", config_schema("bifurcate")["properties"])
        self.assertNotIn("warp", config_schema("eig")["properties"])
        self.assertEqual(config_schema("tile")["properties"]["domain"]["enum"], ["simplex", "hemisphere"])
        with self.assertRaises(InvalidConfigError):
            load_config(None, {"warp": "cos"}, "eig")

    def test_fit_window(self):
        config = load_config(None, {}, "branch")
        self.assertEqual(config.fit_window, [0.05, 0.3])
        config = load_config(None, {"fit_window": "0.1, 0.4"}, "branch")
        self.assertEqual(config.fit_window, [0.1, 0.4])
        for text in ("0.3,0.1", "0.1", "0.1,0.2,0.3", "0,0.2"):
            with self.assertRaises(InvalidConfigError, msg=text):
                load_config(None, {"fit_window": text}, "branch")
        with self.assertRaises(InvalidConfigError):
            load_config(None, {"fit_window": "0.1,0.4"}, "eig")
