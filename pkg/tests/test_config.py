import pytest

from config import Config, RunConfig
from errors import ConfigError


def write_config(tmp_path, text):
    path = tmp_path / 'run.ini'
    path.write_text(text, encoding='utf-8')
    return path


def test_defaults_are_documented_values():
    config = RunConfig()
    assert config.domain.name == 'disk'
    assert config.mesh.h == 0.1
    assert config.solver.p_list == [10.0]
    assert config.diagnostics.threshold == Config.PEAK_THRESHOLD
    assert config.green.robin_samples == 16


def test_from_file_parses_sections(tmp_path):
    path = write_config(tmp_path, """
[domain]
name = ellipse
a = 2
b = 1

[mesh]
h = 0.05
grade = (2,0):8

[solver]
p_list = 6, 8, 10
peaks = 0,3.14

[output]
seed = 7
""")
    config = RunConfig.from_file(path)
    assert config.domain.curve_parameters() == {'a': 2.0, 'b': 1.0}
    assert config.mesh.grade == '(2,0):8'
    assert config.solver.p_list == [6.0, 8.0, 10.0]
    assert config.solver.peaks == '0,3.14'
    assert config.output.seed == 7


def test_unknown_key_is_rejected(tmp_path):
    path = write_config(tmp_path, "[mesh]\nh = 0.1\nsmoothing = 3\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_unknown_section_is_rejected(tmp_path):
    path = write_config(tmp_path, "[plotting]\nstyle = dark\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / 'absent.ini')


@pytest.mark.parametrize('section, values', [
    ('mesh', {'h': 0}),
    ('solver', {'p_list': '10,8'}),
    ('solver', {'ansatz': 'gaussian'}),
    ('domain', {'name': 'square'}),
])
def test_invalid_overrides(section, values):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({section: values})


def test_overrides_skip_none_and_keep_other_values():
    config = RunConfig().with_overrides({'mesh': {'h': 0.05, 'grade': None}, 'solver': {'p_list': '4,5'}})
    assert config.mesh.h == 0.05
    assert config.mesh.grade == ''
    assert config.solver.p_list == [4.0, 5.0]


def test_config_error_exit_code():
    assert ConfigError('x').exit_code == 2


def test_output_directory_defaults_to_root(tmp_path):
    assert str(RunConfig().output_directory()) == Config.OUTPUT_ROOT
    config = RunConfig().with_overrides({'output': {'directory': str(tmp_path)}})
    assert config.output_directory() == tmp_path
