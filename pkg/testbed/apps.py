from django.apps import AppConfig


class TestbedConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'testbed'
    verbose_name = 'Digital twin testbed'
