"""
Ligne de commande Kyle Lab

Une sous-commande par étape du pipeline, plus `all` et `schema`.
"""

import json
import os
from functools import wraps

import click
from flask import current_app
from flask.cli import AppGroup

from .. import EXIT_CONFIG_ERROR, create_lab, handle_exception
from ..services.pipeline import STAGE_ORDER, build_context, exit_code, run_pipeline
from ..services.validation_service import ScenarioConfig
from ..utils.exceptions import ConfigurationException, LabException


def error_line(error: Exception, stage: str) -> str:
    """Ligne d'erreur unique, analysable par machine"""
    if isinstance(error, LabException):
        code, message = error.code or type(error).__name__, error.message
    elif isinstance(error, OSError):
        code, message = 'IO_ERROR', str(error)
    else:
        code, message = type(error).__name__, str(error)
    message = ' '.join(str(message).split()).replace('"', "'")
    return f'error code={code} stage={stage} message="{message}"'


def scenario_options(func):
    """Options communes aux sous-commandes de calcul"""

    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                  help='Fichier JSON du scénario')
    @click.option('--out', 'output_dir', type=click.Path(file_okay=False), default=None,
                  help='Dossier de sortie (prioritaire sur le scénario)')
    @click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None,
                  help='Graine maîtresse (remplace celle du scénario)')
    @click.option('--strict', is_flag=True, default=False, help='Les avertissements deviennent des échecs')
    @click.option('--env', 'env_name', default=lambda: os.environ.get('KYLELAB_ENV', 'development'),
                  show_default='development', help='Configuration du laboratoire')
    @wraps(func)
    def wrapper(*args, **kwargs):
        return func(*args, **kwargs)

    return wrapper


def execute(stages, config_path, output_dir, seed, strict, env_name) -> int:
    """
    Exécute les étapes demandées et renvoie le code de sortie

    Args:
        stages: Noms des étapes
        config_path: Chemin du scénario
        output_dir: Dossier de sortie
        seed: Graine de remplacement
        strict: Mode strict
        env_name: Nom de la configuration

    Returns:
        0 (succès), 1 (configuration ou E/S), 2 (contrôle en échec)
    """
    app = create_lab(env_name)
    with app.app_context():
        return _run(stages, config_path, output_dir, seed, strict)


def _run(stages, config_path, output_dir, seed, strict) -> int:
    try:
        if not config_path:
            raise ConfigurationException("L'option --config est requise", setting='config')
        context = build_context(config_path, output_dir, seed, strict)
        outcomes = run_pipeline(context, stages)
    except (LabException, OSError) as e:
        code = handle_exception(e)
        click.echo(error_line(e, 'config'), err=True)
        return code

    for outcome in outcomes:
        if outcome.error is not None:
            click.echo(error_line(outcome.error, outcome.name), err=True)
    code = exit_code(outcomes)
    summary = ', '.join(f"{o.name}={'ok' if o.passed else 'échec'}" for o in outcomes)
    current_app.logger.info(f"📊 Bilan: {summary} (code {code})")
    return code


@click.group(cls=AppGroup)
def cli():
    """Laboratoire numérique de l'équilibre de Kyle-Back"""


def _stage_command(name: str, help_text: str):
    @cli.command(name=name, help=help_text, with_appcontext=False)
    @scenario_options
    @click.pass_context
    def command(ctx, config_path, output_dir, seed, strict, env_name):
        ctx.exit(execute([name], config_path, output_dir, seed, strict, env_name))

    return command


validate = _stage_command('validate', 'Contrôle des hypothèses sur la grille de sondage')
simulate = _stage_command('simulate', 'Simulation des trajectoires de référence ou contrôlées')
bridge = _stage_command('bridge', 'Conditionnement et simulation du pont')
affine_check = _stage_command('affine-check', 'Résidu de compatibilité de la structure affine')
filter_ = _stage_command('filter', 'Filtrage particulaire et oracle de Kalman-Bucy')
pde = _stage_command('pde', 'Résolution des EDP de prix et fonction de vérification')
equilibrium = _stage_command('equilibrium', 'Richesse, conditions HJB et tournoi')


@cli.command(name='all', with_appcontext=False)
@scenario_options
@click.option('--stage', 'stage_filter', default=None,
              help='Sous-ensemble d\'étapes séparées par des virgules')
@click.pass_context
def run_all(ctx, config_path, output_dir, seed, strict, env_name, stage_filter):
    """Pipeline complet dans l'ordre des dépendances"""
    stages = list(STAGE_ORDER)
    if stage_filter:
        stages = [s.strip() for s in stage_filter.split(',') if s.strip()]
        unknown = [s for s in stages if s not in STAGE_ORDER]
        if unknown:
            click.echo(error_line(ConfigurationException(f"Étape(s) inconnue(s): {', '.join(unknown)}"),
                                  'config'), err=True)
            ctx.exit(EXIT_CONFIG_ERROR)
    ctx.exit(execute(stages, config_path, output_dir, seed, strict, env_name))


@cli.command(name='schema', with_appcontext=False)
@click.option('--out', 'output_path', type=click.Path(dir_okay=False), default=None,
              help='Fichier de destination (sortie standard par défaut)')
def schema(output_path):
    """Publie le schéma JSON des scénarios"""
    text = json.dumps(ScenarioConfig.model_json_schema(), indent=2, sort_keys=True, ensure_ascii=False)
    if output_path:
        with open(output_path, 'w', encoding='utf-8') as handle:
            handle.write(text + '\n')
    else:
        click.echo(text)


if __name__ == '__main__':
    cli()
